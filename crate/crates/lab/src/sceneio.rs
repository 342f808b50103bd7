//! Scene files and image export.
//!
//! A scene set file is `"DPDSET01" | count u32` followed by scene records:
//!
//! ```text
//! "DPDSCN01" | H u32 | W u32 | heads u32
//! image f64[3*H*W] | gt f64[H*W] | heads x (row u32, col u32, radius f64)
//! ```

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use dpd_core::scene::{HeadPoint, Scene};
use dpd_core::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::error::{io_err, LabError, Result};

pub const SET_MAGIC: &[u8; 8] = b"DPDSET01";
pub const SCENE_MAGIC: &[u8; 8] = b"DPDSCN01";

pub fn encode_scene(scene: &Scene, out: &mut Vec<u8>) {
    out.extend_from_slice(SCENE_MAGIC);
    for v in [scene.height(), scene.width(), scene.points.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in scene.image.data().iter().chain(scene.gt_binary.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &scene.points {
        out.extend_from_slice(&(p.row as u32).to_le_bytes());
        out.extend_from_slice(&(p.col as u32).to_le_bytes());
        out.extend_from_slice(&p.radius.to_le_bytes());
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("unexpected end of file".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn u32_at(r: &mut &[u8]) -> std::result::Result<usize, String> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")) as usize)
}

fn f64s(r: &mut &[u8], n: usize) -> std::result::Result<Vec<f64>, String> {
    let bytes = take(r, n.checked_mul(8).ok_or("size overflow")?)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn decode_scene(r: &mut &[u8]) -> std::result::Result<Scene, String> {
    if take(r, 8)? != SCENE_MAGIC {
        return Err("bad scene magic".into());
    }
    let (h, w, k) = (u32_at(r)?, u32_at(r)?, u32_at(r)?);
    let image = Tensor::new(vec![3, h, w], f64s(r, 3 * h * w)?).map_err(|e| e.to_string())?;
    let gt_binary = Tensor::new(vec![1, h, w], f64s(r, h * w)?).map_err(|e| e.to_string())?;
    let mut points = Vec::with_capacity(k.min(r.len() / 16));
    for _ in 0..k {
        let row = u32_at(r)?;
        let col = u32_at(r)?;
        let radius = f64s(r, 1)?[0];
        points.push(HeadPoint { row, col, radius });
    }
    Ok(Scene { image, points, gt_binary })
}

pub fn write_scene_set(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SET_MAGIC);
    buf.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    for s in scenes {
        encode_scene(s, &mut buf);
    }
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(&buf).and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_scene_set(path: &Path) -> Result<Vec<Scene>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let fail = |detail: String| LabError::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = bytes.as_slice();
    if take(&mut r, 8).map_err(fail)? != SET_MAGIC {
        return Err(fail("bad scene set magic".into()));
    }
    let n = u32_at(&mut r).map_err(fail)?;
    let scenes = (0..n).map(|_| decode_scene(&mut r)).collect::<std::result::Result<Vec<_>, _>>().map_err(fail)?;
    if !r.is_empty() {
        return Err(fail(format!("{} trailing bytes", r.len())));
    }
    Ok(scenes)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the image as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(LabError::Config(format!("PPM export needs 3 channels, got {}", c)));
    }
    let plane = h * w;
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_byte(d[p]), to_byte(d[plane + p]), to_byte(d[2 * plane + p])])
    });
    encode_pnm(path, PnmSubtype::Pixmap(SampleEncoding::Binary), img.as_raw(), w, h, ExtendedColorType::Rgb8)
}

/// Writes a single-channel map as binary PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (_, h, w) = map.dims3()?;
    let d = map.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_byte(d[y as usize * w + x as usize])]));
    encode_pnm(path, PnmSubtype::Graymap(SampleEncoding::Binary), img.as_raw(), w, h, ExtendedColorType::L8)
}

fn encode_pnm(path: &Path, subtype: PnmSubtype, raw: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| LabError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    out.flush().map_err(io_err(path))
}
