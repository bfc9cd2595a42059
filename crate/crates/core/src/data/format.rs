//! On-disk formats: planar 8-bit frame files, ground-truth label files and
//! portable pixmaps.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::synth::Clip;
use crate::{Error, Result};

const FRAMES_MAGIC: &[u8; 4] = b"VJFR";
const LABELS_MAGIC: &[u8; 4] = b"VJLB";
const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 4 * 3 + 1;

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header(magic: &[u8; 4], w: usize, h: usize, frames: usize, channels: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [w, h, frames] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(channels);
    out
}

fn read_header(bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize, usize, u8)> {
    if bytes.len() < HEADER || &bytes[..4] != magic {
        return Err(Error::Format(format!("missing {} header", String::from_utf8_lossy(magic))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    Ok((u(6), u(10), u(14), bytes[18]))
}

/// Frame file: header, then per frame one `height × width` plane per channel.
pub fn encode_frames(width: usize, height: usize, frames: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let n = width * height;
    if rgb.len() != n * 3 * frames {
        return Err(Error::Input("pixel buffer does not match dimensions".into()));
    }
    let mut out = header(FRAMES_MAGIC, width, height, frames, 3);
    for f in 0..frames {
        for c in 0..3 {
            out.extend((0..n).map(|i| rgb[(f * n + i) * 3 + c]));
        }
    }
    Ok(out)
}

/// Returns `(width, height, frames, interleaved rgb)`.
pub fn decode_frames(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (w, h, frames, channels) = read_header(bytes, FRAMES_MAGIC)?;
    if channels != 3 {
        return Err(Error::Format(format!("expected 3 channels, found {channels}")));
    }
    let n = w * h;
    let body = &bytes[HEADER..];
    if body.len() != n * 3 * frames {
        return Err(Error::Format(format!("frame file has {} payload bytes, expected {}", body.len(), n * 3 * frames)));
    }
    let mut rgb = vec![0u8; n * 3 * frames];
    for f in 0..frames {
        for c in 0..3 {
            let plane = &body[(f * 3 + c) * n..(f * 3 + c + 1) * n];
            for (i, &v) in plane.iter().enumerate() {
                rgb[(f * n + i) * 3 + c] = v;
            }
        }
    }
    Ok((w, h, frames, rgb))
}

/// Label file: header, class planes, instance planes, depth planes (f32 LE),
/// then the motion direction byte.
pub fn encode_labels(clip: &Clip) -> Vec<u8> {
    let mut out = header(LABELS_MAGIC, clip.width, clip.height, clip.frames, 0);
    out.extend_from_slice(&clip.class);
    out.extend_from_slice(&clip.instance);
    for d in &clip.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(clip.direction as u8);
    out
}

pub struct Labels {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub class: Vec<u8>,
    pub instance: Vec<u8>,
    pub depth: Vec<f32>,
    pub direction: usize,
}

pub fn decode_labels(bytes: &[u8]) -> Result<Labels> {
    let (width, height, frames, _) = read_header(bytes, LABELS_MAGIC)?;
    let n = width * height * frames;
    let body = &bytes[HEADER..];
    if body.len() != n * 6 + 1 {
        return Err(Error::Format("label file is truncated".into()));
    }
    let depth = body[2 * n..6 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Labels {
        width,
        height,
        frames,
        class: body[..n].to_vec(),
        instance: body[n..2 * n].to_vec(),
        depth,
        direction: body[6 * n] as usize,
    })
}

/// Reassembles a clip from its frame and label files.
pub fn load_clip(frames_path: &Path, labels_path: &Path) -> Result<Clip> {
    let (w, h, f, rgb) = decode_frames(&fs::read(frames_path)?)?;
    let l = decode_labels(&fs::read(labels_path)?)?;
    if (l.width, l.height, l.frames) != (w, h, f) {
        return Err(Error::Format("frame and label files disagree on dimensions".into()));
    }
    Ok(Clip {
        width: w,
        height: h,
        frames: f,
        rgb,
        class: l.class,
        instance: l.instance,
        depth: l.depth,
        direction: l.direction,
        objects: Vec::new(),
    })
}

/// Binary PPM (`P6`) of interleaved RGB.
pub fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&rgb[..width * height * 3]);
    out
}

/// Binary PGM (`P5`) of one 8-bit plane.
pub fn pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&gray[..width * height]);
    out
}

/// Parses a binary `P5`/`P6` pixmap into `(width, height, channels, data)`.
pub fn read_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported pixmap kind {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad pixmap field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format("only 8-bit pixmaps are supported".into()));
    }
    let need = w * h * channels;
    if bytes.len() < i + need {
        return Err(Error::Format("truncated pixmap data".into()));
    }
    Ok((w, h, channels, bytes[i..i + need].to_vec()))
}
