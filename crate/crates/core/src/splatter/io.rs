use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{color_width, GaussianCloud, Image, SplatError};
use crate::autodiff::Array;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SplatError + '_ {
    move |source| SplatError::Io { path: path.display().to_string(), source }
}

/// Quantize to 8 bits: clamp to `[0, 1]`, round half up.
pub(crate) fn to_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), SplatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| SplatError::Png { path: path.display().to_string(), msg: e.to_string() };
    let mut w = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    w.write_image_data(&bytes).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Read an 8-bit RGB or RGBA PNG into `[0, 1]` values (alpha dropped).
pub fn read_png(path: &Path) -> Result<Image, SplatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let png_err = |msg: String| SplatError::Png { path: path.display().to_string(), msg };
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(png_err(format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * channels].chunks(channels) {
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        data.extend(rgb.iter().map(|v| *v as f64 / 255.0));
    }
    Image::new(w, h, data)
}

const HEADER: &str = "gaussians";

/// One line per Gaussian: mean (3), log-scale (3), quaternion (4), opacity
/// logit (1), colors (3 or 12).
pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<(), SplatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let io = io_err(path);
    let mut body = format!("{HEADER} {} sh_degree {}\n", cloud.len(), cloud.sh_degree);
    let cw = color_width(cloud.sh_degree);
    for i in 0..cloud.len() {
        let fields = cloud.means.data()[3 * i..3 * i + 3]
            .iter()
            .chain(&cloud.log_scales.data()[3 * i..3 * i + 3])
            .chain(&cloud.quats.data()[4 * i..4 * i + 4])
            .chain(std::iter::once(&cloud.opacity_logits.data()[i]))
            .chain(&cloud.colors.data()[cw * i..cw * (i + 1)]);
        let line: Vec<String> = fields.map(|v| format!("{v:e}")).collect();
        body.push_str(&line.join(" "));
        body.push('\n');
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(io)
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud, SplatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let fmt = |line: usize, msg: String| SplatError::Format { path: path.display().to_string(), line, msg };
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?.map_err(io_err(path))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (count, degree) = match parts.as_slice() {
        [HEADER, n, "sh_degree", d] => (
            n.parse::<usize>().map_err(|e| fmt(1, format!("bad count: {e}")))?,
            d.parse::<u8>().map_err(|e| fmt(1, format!("bad sh degree: {e}")))?,
        ),
        _ => return Err(fmt(1, format!("expected `{HEADER} <count> sh_degree <d>`, got `{header}`"))),
    };
    if degree > 1 {
        return Err(fmt(1, format!("sh degree {degree} not supported")));
    }
    let cw = color_width(degree);
    let width = 11 + cw;
    let mut cols: [Vec<f64>; 5] = Default::default();
    let mut seen = 0;
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| fmt(idx + 2, format!("bad number: {e}")))?;
        if vals.len() != width {
            return Err(fmt(idx + 2, format!("expected {width} fields, got {}", vals.len())));
        }
        cols[0].extend(&vals[0..3]);
        cols[1].extend(&vals[3..6]);
        cols[2].extend(&vals[6..10]);
        cols[3].push(vals[10]);
        cols[4].extend(&vals[11..]);
        seen += 1;
    }
    if seen != count {
        return Err(fmt(1, format!("header says {count} gaussians, found {seen}")));
    }
    let [m, s, q, o, c] = cols;
    GaussianCloud::new(
        Array::new(&[count, 3], m)?,
        Array::new(&[count, 3], s)?,
        Array::new(&[count, 4], q)?,
        Array::new(&[count], o)?,
        Array::new(&[count, cw], c)?,
        degree,
    )
}
