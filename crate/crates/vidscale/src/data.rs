//! Clip ingestion and augmentation.
//!
//! A corpus is a directory tree of per-clip frame folders (8-bit RGB PNG,
//! lexicographic frame order) plus a line-oriented manifest:
//! `<split>\t<clip-dir>` per line, paths relative to the manifest location.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ops::{apply_stencil, gaussian_stencil, subsample_stencil, Axis};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One clip on disk: an ordered list of frame images.
#[derive(Clone, Debug)]
pub struct ClipRecord {
    pub frames: Vec<PathBuf>,
    pub source: String,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub train: Vec<ClipRecord>,
    pub eval: Vec<ClipRecord>,
}

fn ingestion(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Scan one directory for PNG frames in lexicographic order.
pub fn scan_clip_dir(dir: &Path) -> Result<ClipRecord> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| ingestion(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(ingestion(dir, "no PNG frames"));
    }
    Ok(ClipRecord {
        frames,
        source: dir.display().to_string(),
    })
}

/// Read a manifest and scan each clip directory for PNG frames.
pub fn read_manifest(manifest: &Path) -> Result<Corpus> {
    let file = File::open(manifest).map_err(|e| ingestion(manifest, e.to_string()))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut corpus = Corpus::default();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ingestion(manifest, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, rel) = line.split_once('\t').ok_or_else(|| {
            ingestion(
                manifest,
                format!("line {}: expected <split>\\t<clip-dir>", ln + 1),
            )
        })?;
        let dir = base.join(rel);
        let mut frames: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| ingestion(&dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        frames.sort();
        if frames.is_empty() {
            return Err(ingestion(&dir, "no PNG frames"));
        }
        let rec = ClipRecord {
            frames,
            source: rel.to_string(),
        };
        match split {
            "train" => corpus.train.push(rec),
            "eval" => corpus.eval.push(rec),
            other => {
                return Err(ingestion(
                    manifest,
                    format!("line {}: unknown split {other:?}", ln + 1),
                ))
            }
        }
    }
    Ok(corpus)
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| ingestion(path, e.to_string()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| ingestion(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ingestion(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ingestion(path, "frames must be 8-bit"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..info.buffer_size()].to_vec(),
        png::ColorType::Rgba => buf[..info.buffer_size()]
            .chunks(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        png::ColorType::Grayscale => buf[..info.buffer_size()]
            .iter()
            .flat_map(|&v| [v, v, v])
            .collect(),
        other => {
            return Err(ingestion(path, format!("unsupported color type {other:?}")));
        }
    };
    Ok((w, h, rgb))
}

/// Load a clip as `(1, t, 3, H, W)` in `[0, 1]`, preserving frame order.
/// `length` truncates to the leading frames when set.
pub fn load_clip(rec: &ClipRecord, length: Option<usize>) -> Result<Tensor> {
    let take = length.unwrap_or(rec.frames.len());
    if take == 0 || rec.frames.len() < take {
        return Err(ingestion(
            rec.frames
                .first()
                .map(|p| p.as_path())
                .unwrap_or(Path::new("")),
            format!("clip has {} frames, need {take}", rec.frames.len()),
        ));
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut data: Vec<f64> = Vec::new();
    for path in rec.frames.iter().take(take) {
        let (w, h, rgb) = read_png(path)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(ingestion(
                    path,
                    format!("frame is {w}x{h}, clip started as {}x{}", d.0, d.1),
                ));
            }
            _ => {}
        }
        // interleaved RGB rows -> channel planes
        for c in 0..3 {
            for p in 0..w * h {
                data.push(rgb[p * 3 + c] as f64 / 255.0);
            }
        }
    }
    let (w, h) = dims.unwrap();
    Tensor::from_vec(&[1, take, 3, h, w], data)
}

/// Write a `(1, t, 3, H, W)` clip as zero-padded PNG frames (`frame_000.png`,
/// ...), quantizing to the 255-level grid.
pub fn save_clip_frames(dir: &Path, clip: &Tensor) -> Result<Vec<PathBuf>> {
    let [b, t, c, h, w] = clip.dims5()?;
    if b != 1 || c != 3 {
        return Err(Error::dim(format!(
            "frame export wants a single-batch 3-channel clip, got {:?}",
            clip.shape()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(t);
    for ti in 0..t {
        let path = dir.join(format!("frame_{ti:03}.png"));
        let mut rgb = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for ci in 0..3 {
                    let v = clip.at5(0, ti, ci, y, x);
                    rgb[(y * w + x) * 3 + ci] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let file = File::create(&path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| ingestion(&path, e.to_string()))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| ingestion(&path, e.to_string()))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate90: bool,
    pub crop: (usize, usize),
    pub seed: u64,
}

/// Horizontal flip (every frame).
pub fn flip_h(clip: &Tensor) -> Tensor {
    let [b, t, c, h, w] = clip.dims5().expect("flip_h wants a clip");
    let mut out = Tensor::zeros(clip.shape());
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = clip.at5(bi, ti, ci, y, w - 1 - x);
                        out.set5(bi, ti, ci, y, x, v);
                    }
                }
            }
        }
    }
    out
}

/// Rotate `quarters` * 90 degrees counterclockwise (every frame).
pub fn rot90(clip: &Tensor, quarters: usize) -> Tensor {
    let mut cur = clip.clone();
    for _ in 0..quarters % 4 {
        let [b, t, c, h, w] = cur.dims5().expect("rot90 wants a clip");
        let mut out = Tensor::zeros(&[b, t, c, w, h]);
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            // (y, x) -> (w-1-x, y)
                            let v = cur.at5(bi, ti, ci, y, x);
                            out.set5(bi, ti, ci, w - 1 - x, y, v);
                        }
                    }
                }
            }
        }
        cur = out;
    }
    cur
}

/// Spatial crop of every frame.
pub fn crop(clip: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let [b, t, c, h, w] = clip.dims5()?;
    if y0 + ch > h || x0 + cw > w {
        return Err(Error::dim(format!(
            "crop {ch}x{cw}+{y0}+{x0} exceeds frame {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[b, t, c, ch, cw]);
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..ch {
                    for x in 0..cw {
                        out.set5(bi, ti, ci, y, x, clip.at5(bi, ti, ci, y0 + y, x0 + x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Random crop/flip/rotation, deterministic in the config seed. The same
/// transform applies to every frame of the clip.
pub fn augment(clip: &Tensor, cfg: &AugmentConfig) -> Result<Tensor> {
    let [_, _, _, h, w] = clip.dims5()?;
    let (ch, cw) = cfg.crop;
    if ch > h || cw > w {
        return Err(Error::dim(format!(
            "crop {ch}x{cw} larger than frame {h}x{w}"
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let y0 = if h > ch { rng.below(h - ch + 1) } else { 0 };
    let x0 = if w > cw { rng.below(w - cw + 1) } else { 0 };
    let mut out = crop(clip, y0, x0, ch, cw)?;
    if cfg.flip && rng.uniform() < 0.5 {
        out = flip_h(&out);
    }
    if cfg.rotate90 && ch == cw {
        let quarters = rng.below(4);
        out = rot90(&out, quarters);
    }
    Ok(out)
}

/// Framewise Gaussian blur followed by stride-`k` subsampling (offset 0).
pub fn blur_downsample(x: &Tensor, sigma: f64, k: usize) -> Result<Tensor> {
    let [_, _, _, h, w] = x.dims5()?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!(
            "frame {h}x{w} not divisible by stride {k}"
        )));
    }
    let blurred = {
        let sh = gaussian_stencil(h, sigma);
        let sw = gaussian_stencil(w, sigma);
        let tmp = apply_stencil(x, Axis::Height, &sh)?;
        apply_stencil(&tmp, Axis::Width, &sw)?
    };
    let ssh = subsample_stencil(h, k)?;
    let ssw = subsample_stencil(w, k)?;
    let tmp = apply_stencil(&blurred, Axis::Height, &ssh)?;
    apply_stencil(&tmp, Axis::Width, &ssw)
}

/// Generate a small synthetic corpus (moving gradients, oriented sinusoid
/// textures, sharp-edged rectangles and checker patches) and write it under
/// `dir` with a manifest. Returns the manifest path. Deterministic in `seed`.
pub fn write_synthetic_corpus(
    dir: &Path,
    clips: usize,
    frames: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.tsv");
    let mut lines = Vec::new();
    let mut rng = Rng::new(seed);
    for ci in 0..clips {
        let clip = synthetic_clip(&mut rng, frames, h, w);
        let sub = format!("clip_{ci:03}");
        save_clip_frames(&dir.join(&sub), &clip)?;
        lines.push(format!("train\t{sub}"));
    }
    let mut f = BufWriter::new(File::create(&manifest)?);
    for l in &lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(manifest)
}

/// One synthetic clip mixing smooth motion with high-frequency structure.
pub fn synthetic_clip(rng: &mut Rng, frames: usize, h: usize, w: usize) -> Tensor {
    let mut clip = Tensor::zeros(&[1, frames, 3, h, w]);
    // smooth moving gradient base
    let base_phase = rng.uniform() * std::f64::consts::TAU;
    let (vx, vy) = (rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0);
    let base_amp = 0.25 + 0.2 * rng.uniform();
    // oriented sinusoid texture
    let freq = 0.5 + rng.uniform() * 1.2;
    let angle = rng.uniform() * std::f64::consts::PI;
    let (ca, sa) = (angle.cos(), angle.sin());
    let tex_amp = 0.1 + 0.15 * rng.uniform();
    // moving rectangle with sharp edges
    let rw = 2 + rng.below(w / 2);
    let rh = 2 + rng.below(h / 2);
    let (rx0, ry0) = (rng.below(w), rng.below(h));
    let (rvx, rvy) = (rng.below(3) as isize - 1, rng.below(3) as isize - 1);
    let rect_col = [rng.uniform(), rng.uniform(), rng.uniform()];
    // checker patch
    let checker = rng.uniform() < 0.5;
    let (cx0, cy0) = (rng.below(w), rng.below(h));
    let (cw2, ch2) = (2 + rng.below(w / 2), 2 + rng.below(h / 2));

    for t in 0..frames {
        let tf = t as f64;
        for c in 0..3 {
            let chan_shift = c as f64 * 0.7;
            for y in 0..h {
                for x in 0..w {
                    let fx = x as f64;
                    let fy = y as f64;
                    let mut v = 0.5
                        + base_amp
                            * ((fx * 0.08 + fy * 0.06 + vx * tf * 0.9 + base_phase + chan_shift)
                                .sin());
                    v += tex_amp * ((ca * fx + sa * fy) * freq + vy * tf).sin();
                    let rx = (rx0 as isize + rvx * t as isize).rem_euclid(w as isize) as usize;
                    let ry = (ry0 as isize + rvy * t as isize).rem_euclid(h as isize) as usize;
                    if (x + w - rx) % w < rw && (y + h - ry) % h < rh {
                        v = 0.7 * rect_col[c] + 0.3 * v;
                    }
                    if checker
                        && (x + w - cx0) % w < cw2
                        && (y + h - cy0) % h < ch2
                        && (x + y + t) % 2 == 0
                    {
                        v = 1.0 - v;
                    }
                    clip.set5(0, t, c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    crate::ops::quantize_value(&clip)
}
