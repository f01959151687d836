//! Images, the synthetic identity dataset generator, and dataset disk I/O.
//!
//! Synthetic faces are smooth blob layouts: a skin-toned head ellipse with
//! eyes, brows, nose, mouth, and a few sharp beauty marks whose positions,
//! sizes, and tones are drawn once per identity. Each rendered image adds
//! nuisance variation (translation, brightness jitter, pixel noise) so that
//! images within an identity cluster tightly but never repeat.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// A single image, channel-major ([C,H,W]), values nominally in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
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

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Stack images into a batch tensor [N,C,H,W].
pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot batch zero images".into()));
    }
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::Dataset("mixed image shapes in batch".into()));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// A labeled image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

struct FaceLayout {
    skin: [f64; 3],
    face_cx: f64,
    face_cy: f64,
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_dy: f64,
    eye_r: f64,
    eye_tone: f64,
    brow_dy: f64,
    brow_len: f64,
    brow_thick: f64,
    brow_tilt: f64,
    nose_len: f64,
    nose_w: f64,
    mouth_dy: f64,
    mouth_hw: f64,
    mouth_thick: f64,
    mouth_red: f64,
    marks: Vec<(f64, f64, f64)>,
}

impl FaceLayout {
    fn draw(rng: &mut RngStream) -> Self {
        let lum = rng.uniform_in(0.55, 0.8);
        let skin = [lum, lum * rng.uniform_in(0.78, 0.88), lum * rng.uniform_in(0.6, 0.75)];
        let n_marks = 2 + rng.below(2);
        let marks = (0..n_marks)
            .map(|_| {
                (
                    rng.uniform_in(-0.22, 0.22),
                    rng.uniform_in(-0.25, 0.3),
                    rng.uniform_in(0.25, 0.6),
                )
            })
            .collect();
        FaceLayout {
            skin,
            face_cx: 0.5 + rng.uniform_in(-0.02, 0.02),
            face_cy: 0.52 + rng.uniform_in(-0.02, 0.02),
            face_rx: rng.uniform_in(0.26, 0.34),
            face_ry: rng.uniform_in(0.33, 0.42),
            eye_dx: rng.uniform_in(0.11, 0.17),
            eye_dy: rng.uniform_in(0.08, 0.16),
            eye_r: rng.uniform_in(0.028, 0.05),
            eye_tone: rng.uniform_in(0.05, 0.25),
            brow_dy: rng.uniform_in(0.05, 0.09),
            brow_len: rng.uniform_in(0.07, 0.13),
            brow_thick: rng.uniform_in(0.012, 0.028),
            brow_tilt: rng.uniform_in(-0.25, 0.25),
            nose_len: rng.uniform_in(0.08, 0.16),
            nose_w: rng.uniform_in(0.018, 0.04),
            mouth_dy: rng.uniform_in(0.13, 0.22),
            mouth_hw: rng.uniform_in(0.07, 0.14),
            mouth_thick: rng.uniform_in(0.018, 0.04),
            mouth_red: rng.uniform_in(0.3, 0.55),
            marks,
        }
    }
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // Soft indicator: 1 well inside (x < 0), 0 outside, smooth across ~edge.
    1.0 / (1.0 + (x / edge).exp())
}

/// Render one face; `(tx, ty)` shift the whole layout in unit coordinates.
fn render_face(layout: &FaceLayout, size: (usize, usize), tx: f64, ty: f64) -> Image {
    let (h, w) = size;
    let mut img = Image::zeros(3, h, w);
    let cx = layout.face_cx + tx;
    let cy = layout.face_cy + ty;
    for y in 0..h {
        for x in 0..w {
            // Pixel center in unit coordinates.
            let ux = (x as f64 + 0.5) / w as f64;
            let uy = (y as f64 + 0.5) / h as f64;
            let dx = ux - cx;
            let dy = uy - cy;

            // Head: soft ellipse over a dark background, shaded to the rim.
            let e = (dx / layout.face_rx).powi(2) + (dy / layout.face_ry).powi(2) - 1.0;
            let head = smoothstep(0.08, e);
            let shade = 1.0 - 0.25 * ((dx / layout.face_rx).powi(2) + (dy / layout.face_ry).powi(2)).min(1.0);
            let mut rgb = [0.12, 0.12, 0.14];
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - head) + layout.skin[c] * shade * head;
            }

            // Darkening features are multiplicative dips toward a tone.
            let mut dark = 0.0f64; // 0..1 strength of darkening
            let mut tone = 0.0f64;

            // Eyes: dark discs with a bright glint off-center.
            for side in [-1.0, 1.0] {
                let ex = dx - side * layout.eye_dx;
                let ey = dy + layout.eye_dy;
                let d2 = ex * ex + ey * ey;
                let disc = (-d2 / (2.0 * layout.eye_r * layout.eye_r)).exp();
                if disc > dark {
                    dark = disc;
                    tone = layout.eye_tone;
                }
                // Glint: small bright dot.
                let gx = ex - 0.3 * layout.eye_r;
                let gy = ey - 0.3 * layout.eye_r;
                let glint = (-(gx * gx + gy * gy) / (2.0 * (0.25 * layout.eye_r).powi(2))).exp();
                for c in 0..3 {
                    rgb[c] += 0.8 * glint * head;
                }
                // Brows: tilted bars above the eyes.
                let bx = ex;
                let by = ey + layout.brow_dy + layout.brow_tilt * side * bx;
                let bar = (-((bx / layout.brow_len).powi(2) + (by / layout.brow_thick).powi(2))).exp();
                if bar > dark {
                    dark = bar;
                    tone = 0.15;
                }
            }

            // Nose: vertical stroke from center downward.
            let ny = dy - layout.nose_len * 0.5;
            let nose = (-((dx / layout.nose_w).powi(2) + (ny / (layout.nose_len * 0.7)).powi(2))).exp();
            if nose > dark {
                dark = nose * 0.45;
                tone = layout.skin[0] * 0.55;
            }

            // Mouth: horizontal bar below center, reddish.
            let my = dy - layout.mouth_dy;
            let mouth = (-((dx / layout.mouth_hw).powi(2) + (my / layout.mouth_thick).powi(2))).exp();
            if mouth > dark {
                dark = mouth;
                tone = layout.mouth_red;
            }

            // Beauty marks: small sharp dots.
            for &(mx, my2, mtone) in &layout.marks {
                let ddx = dx - mx;
                let ddy = dy - my2;
                let mark = (-(ddx * ddx + ddy * ddy) / (2.0 * 0.012f64.powi(2))).exp();
                if mark > dark {
                    dark = mark;
                    tone = mtone;
                }
            }

            let dark = dark.min(1.0) * head;
            let toned = [tone, tone * 0.9, tone * 0.85];
            for c in 0..3 {
                let v = rgb[c] * (1.0 - dark) + toned[c] * dark;
                *img.at_mut(c, y, x) = v as f32;
            }
        }
    }
    img.clamp_unit();
    img
}

/// Generate a labeled synthetic identity dataset, deterministic per seed.
pub fn gen_synthetic_faces(
    n_ids: usize,
    n_per_id: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if n_ids < 2 || n_per_id < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 identities and 2 images each, got {n_ids}x{n_per_id}"
        )));
    }
    if size.0 < 8 || size.1 < 8 {
        return Err(Error::Dataset(format!(
            "image size {}x{} too small",
            size.0, size.1
        )));
    }
    let root = RngStream::new(seed);
    let mut images = Vec::with_capacity(n_ids * n_per_id);
    let mut labels = Vec::with_capacity(n_ids * n_per_id);
    for id in 0..n_ids {
        let mut id_rng = root.substream_indexed("identity", id as u64);
        let layout = FaceLayout::draw(&mut id_rng);
        for j in 0..n_per_id {
            let mut img_rng = root.substream_indexed("image", (id * n_per_id + j) as u64);
            let tx = img_rng.uniform_in(-0.1, 0.1);
            let ty = img_rng.uniform_in(-0.1, 0.1);
            let mut img = render_face(&layout, size, tx, ty);
            let brightness = img_rng.uniform_in(-0.08, 0.08) as f32;
            for v in &mut img.data {
                *v += brightness + (img_rng.normal() * 0.02) as f32;
            }
            img.clamp_unit();
            images.push(img);
            labels.push(id);
        }
    }
    Ok(Dataset {
        images,
        labels,
        n_classes: n_ids,
    })
}

// ---------------------------------------------------------------------------
// Disk format: a tiny header (3 LE u32: channels, height, width) followed by
// LE f32 pixel data; datasets are a directory of .img files plus labels.csv
// rows of `path,identity`.
// ---------------------------------------------------------------------------

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for dim in [img.channels, img.height, img.width] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)?;
    let dims: Vec<usize> = head
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != c * h * w * 4 {
        return Err(Error::Dataset(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            c * h * w * 4,
            raw.len()
        )));
    }
    let data = raw
        .chunks(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Image {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Write `images/<index>.img` files and a labels.csv manifest.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut manifest = String::from("path,identity\n");
    let digits = ds.len().to_string().len();
    for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let rel = format!("images/{i:0digits$}.img");
        write_image(&dir.join(&rel), img)?;
        manifest.push_str(&format!("{rel},{label}\n"));
    }
    std::fs::write(dir.join("labels.csv"), manifest)?;
    Ok(())
}

/// Parse a `path,identity` manifest; paths are relative to the manifest.
pub fn read_manifest(manifest: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let text = std::fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line.starts_with("path,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (path, id) = line.rsplit_once(',').ok_or_else(|| {
            Error::Dataset(format!("{}:{}: expected 'path,identity'", manifest.display(), ln + 1))
        })?;
        let id: usize = id.trim().parse().map_err(|_| {
            Error::Dataset(format!("{}:{}: bad identity '{id}'", manifest.display(), ln + 1))
        })?;
        out.push((base.join(path.trim()), id));
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: manifest lists no images",
            manifest.display()
        )));
    }
    Ok(out)
}

/// Load a dataset saved by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(&dir.join("labels.csv"))?;
    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for (path, id) in entries {
        images.push(read_image(&path)?);
        labels.push(id);
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        images,
        labels,
        n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = gen_synthetic_faces(20, 50, (32, 32), 7).unwrap();
        let b = gen_synthetic_faces(20, 50, (32, 32), 7).unwrap();
        assert_eq!(a.images.len(), 1000);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data, y.data);
        }
        let mut counts = vec![0usize; 20];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 50));

        let c = gen_synthetic_faces(20, 50, (32, 32), 8).unwrap();
        assert_ne!(a.images[0].data, c.images[0].data);
    }

    #[test]
    fn intra_identity_distance_below_inter_identity_distance() {
        let ds = gen_synthetic_faces(6, 6, (32, 32), 3).unwrap();
        let dist = |a: &Image, b: &Image| -> f64 {
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                let d = dist(&ds.images[i], &ds.images[j]);
                if ds.labels[i] == ds.labels[j] {
                    intra.push(d);
                } else {
                    inter.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&intra) < mean(&inter),
            "intra {} !< inter {}",
            mean(&intra),
            mean(&inter)
        );
    }

    #[test]
    fn degenerate_requests_rejected() {
        assert!(gen_synthetic_faces(1, 10, (32, 32), 0).is_err());
        assert!(gen_synthetic_faces(5, 1, (32, 32), 0).is_err());
        assert!(gen_synthetic_faces(5, 5, (4, 4), 0).is_err());
    }

    #[test]
    fn image_roundtrip_and_dataset_io() {
        let ds = gen_synthetic_faces(3, 2, (16, 16), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.n_classes, 3);
        for (a, b) in loaded.images.iter().zip(&ds.images) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn truncated_image_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::zeros(3, 8, 8);
        let path = dir.path().join("x.img");
        write_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn batch_tensor_stacks_row_major() {
        let ds = gen_synthetic_faces(2, 2, (8, 8), 1).unwrap();
        let refs: Vec<&Image> = ds.images.iter().collect();
        let t: Tensor<f32> = batch_tensor(&refs).unwrap();
        assert_eq!(t.shape(), [4, 3, 8, 8]);
        assert_eq!(t.data()[..192], ds.images[0].data[..]);
    }
}
