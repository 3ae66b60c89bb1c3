//! On-disk scene archives: `scenes.manifest` plus one PNG per scene.
//!
//! Manifest lines are tab separated: `id`, `seed`, comma-joined category
//! list, and `cat,x1,y1,x2,y2;...` boxes.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::scene::{RgbImage, Scene, SceneObject};
use crate::error::{Error, Result};
use crate::proposals::BBox;

pub const MANIFEST: &str = "scenes.manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchivedScene {
    pub id: String,
    pub seed: u64,
    pub scene: Scene,
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Decode(e.to_string()))?;
        writer
            .write_image_data(&image.to_rgb8())
            .map_err(|e| Error::Decode(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::Decode(format!("unsupported colour type {other:?}"))),
    };
    RgbImage::from_rgb8(w, h, &rgb)
}

fn manifest_line(s: &ArchivedScene) -> String {
    let cats: Vec<&str> = s.scene.objects.iter().map(|o| o.category.as_str()).collect();
    let boxes: Vec<String> = s
        .scene
        .objects
        .iter()
        .map(|o| format!("{},{},{},{},{}", o.category, o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2))
        .collect();
    format!("{}\t{}\t{}\t{}", s.id, s.seed, cats.join(","), boxes.join(";"))
}

pub fn write_archive(dir: &Path, scenes: &[ArchivedScene]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for s in scenes {
        let path = images.join(format!("{}.png", s.id));
        fs::write(&path, encode_png(&s.scene.image)?).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&manifest_line(s));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    use std::io::Write;
    let mut w = BufWriter::new(file);
    w.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn parse_manifest_line(line: &str, line_no: usize) -> Result<(String, u64, Vec<(String, BBox)>)> {
    let bad = |m: &str| Error::MalformedRecord {
        line: line_no,
        message: format!("{MANIFEST}: {m}"),
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(bad("expected 4 tab-separated fields"));
    }
    let seed = fields[1].parse::<u64>().map_err(|_| bad("bad seed"))?;
    let mut objects = Vec::new();
    for item in fields[3].split(';').filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(',').collect();
        if parts.len() != 5 {
            return Err(bad("box needs cat,x1,y1,x2,y2"));
        }
        let v: Vec<f64> = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad box coordinate"))?;
        let b = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(&e.to_string()))?;
        objects.push((parts[0].to_string(), b));
    }
    Ok((fields[0].to_string(), seed, objects))
}

pub fn read_archive(dir: &Path) -> Result<Vec<ArchivedScene>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, seed, objects) = parse_manifest_line(line, i + 1)?;
        let img_path = dir.join("images").join(format!("{id}.png"));
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = decode_png(&bytes)?;
        out.push(ArchivedScene {
            id,
            seed,
            scene: Scene {
                image,
                objects: objects
                    .into_iter()
                    .map(|(category, bbox)| SceneObject {
                        category,
                        bbox,
                        shape: None,
                    })
                    .collect(),
            },
        });
    }
    Ok(out)
}
