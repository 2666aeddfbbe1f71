//! Raster and event file formats.
//!
//! * PGM `P5`, 8 bit: intensity images, mapped to `[0, 1]`.
//! * PFM `Pf` (grayscale), little-endian (scale `-1.0`), rows stored
//!   bottom-to-top: real-valued fields. Samples are 32-bit floats on disk.
//! * CSV `t,x,y,p`: event streams, `t` in seconds with 9 decimals.
//!
//! Vector fields and histograms are pairs of PFM files sharing a prefix
//! (`<prefix>_u.pfm`/`<prefix>_v.pfm`, `<prefix>_pos.pfm`/`<prefix>_neg.pfm`).

use crate::error::{Error, Result};
use crate::events::{Event, EventHistogram, EventStream};
use crate::field::{ScalarField, VectorField};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub fn write_pgm<W: Write>(mut w: W, img: &ScalarField) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width(), img.height())?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&a| (a.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads the next whitespace-separated header token, skipping `#` comments.
fn header_token<R: BufRead>(r: &mut R, format: &'static str) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format(format, "truncated header"));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    String::from_utf8(tok).map_err(|_| Error::format(format, "non-ASCII header"))
}

fn header_usize<R: BufRead>(r: &mut R, format: &'static str, what: &str) -> Result<usize> {
    let t = header_token(r, format)?;
    t.parse()
        .map_err(|_| Error::format(format, format!("bad {what} '{t}'")))
}

pub fn read_pgm<R: Read>(r: R) -> Result<ScalarField> {
    let mut r = BufReader::new(r);
    let magic = header_token(&mut r, "PGM")?;
    if magic != "P5" {
        return Err(Error::format(
            "PGM",
            format!("expected magic P5, found '{magic}'"),
        ));
    }
    let w = header_usize(&mut r, "PGM", "width")?;
    let h = header_usize(&mut r, "PGM", "height")?;
    let maxval = header_usize(&mut r, "PGM", "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            "PGM",
            format!("only 8-bit maxval supported, got {maxval}"),
        ));
    }
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format("PGM", "pixel data shorter than header says"))?;
    ScalarField::new(
        w,
        h,
        bytes.iter().map(|&b| b as f64 / maxval as f64).collect(),
    )
}

pub fn write_pfm<W: Write>(mut w: W, f: &ScalarField) -> Result<()> {
    write!(w, "Pf\n{} {}\n-1.0\n", f.width(), f.height())?;
    let mut buf = Vec::with_capacity(f.len() * 4);
    for y in (0..f.height()).rev() {
        for x in 0..f.width() {
            buf.extend_from_slice(&(f.get(x, y) as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm<R: Read>(r: R) -> Result<ScalarField> {
    let mut r = BufReader::new(r);
    let magic = header_token(&mut r, "PFM")?;
    if magic != "Pf" {
        return Err(Error::format(
            "PFM",
            format!("expected grayscale magic Pf, found '{magic}'"),
        ));
    }
    let w = header_usize(&mut r, "PFM", "width")?;
    let h = header_usize(&mut r, "PFM", "height")?;
    let scale_tok = header_token(&mut r, "PFM")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format("PFM", format!("bad scale '{scale_tok}'")))?;
    if scale == 0.0 {
        return Err(Error::format("PFM", "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut bytes = vec![0u8; w * h * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::format("PFM", "pixel data shorter than header says"))?;
    let mut data = vec![0.0; w * h];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (i / w, i % w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    ScalarField::new(w, h, data)
}

pub fn write_events_csv<W: Write>(mut w: W, s: &EventStream) -> Result<()> {
    writeln!(w, "t,x,y,p")?;
    for e in s.events() {
        writeln!(w, "{:.9},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    Ok(())
}

/// Reads a `t,x,y,p` CSV. The file does not record the sensor size, so the
/// caller supplies it.
pub fn read_events_csv<R: Read>(r: R, width: usize, height: usize) -> Result<EventStream> {
    let r = BufReader::new(r);
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != "t,x,y,p" {
        return Err(Error::format(
            "event CSV",
            format!("expected header 't,x,y,p', found '{header}'"),
        ));
    }
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::format("event CSV", format!("line {}: bad {what}: '{line}'", i + 2))
        };
        let mut cols = line.split(',');
        let mut next = || cols.next().map(str::trim);
        let t = next()
            .and_then(|c| c.parse::<f64>().ok())
            .ok_or_else(|| bad("t"))?;
        let x = next()
            .and_then(|c| c.parse::<u32>().ok())
            .ok_or_else(|| bad("x"))?;
        let y = next()
            .and_then(|c| c.parse::<u32>().ok())
            .ok_or_else(|| bad("y"))?;
        let p = next()
            .and_then(|c| c.parse::<i8>().ok())
            .ok_or_else(|| bad("p"))?;
        if next().is_some() {
            return Err(bad("column count"));
        }
        events.push(Event { t, x, y, p });
    }
    EventStream::new(width, height, events)
}

pub fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { format, reason } => Error::Format {
            format,
            reason: format!("{}: {reason}", path.display()),
        },
        Error::Dimension(m) => Error::Dimension(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_pgm(path: &Path, img: &ScalarField) -> Result<()> {
    let mut w = create(path)?;
    write_pgm(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<ScalarField> {
    with_path(path, read_pgm(open(path)?))
}

pub fn save_pfm(path: &Path, f: &ScalarField) -> Result<()> {
    let mut w = create(path)?;
    write_pfm(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<ScalarField> {
    with_path(path, read_pfm(open(path)?))
}

pub fn save_vector_field(prefix: &Path, f: &VectorField) -> Result<()> {
    save_pfm(&suffixed(prefix, "_u.pfm"), &f.u_field())?;
    save_pfm(&suffixed(prefix, "_v.pfm"), &f.v_field())
}

pub fn load_vector_field(prefix: &Path) -> Result<VectorField> {
    let u = load_pfm(&suffixed(prefix, "_u.pfm"))?;
    let v = load_pfm(&suffixed(prefix, "_v.pfm"))?;
    with_path(prefix, VectorField::from_components(&u, &v))
}

pub fn save_histogram(prefix: &Path, h: &EventHistogram) -> Result<()> {
    save_pfm(&suffixed(prefix, "_pos.pfm"), &h.pos_field())?;
    save_pfm(&suffixed(prefix, "_neg.pfm"), &h.neg_field())
}

pub fn load_histogram(prefix: &Path) -> Result<EventHistogram> {
    let pos = load_pfm(&suffixed(prefix, "_pos.pfm"))?;
    let neg = load_pfm(&suffixed(prefix, "_neg.pfm"))?;
    if pos.shape() != neg.shape() {
        return Err(Error::Dimension(format!(
            "{}: _pos and _neg sizes differ",
            prefix.display()
        )));
    }
    with_path(
        prefix,
        EventHistogram::new(pos.width(), pos.height(), pos.into_data(), neg.into_data()),
    )
}

pub fn save_events_csv(path: &Path, s: &EventStream) -> Result<()> {
    let mut w = create(path)?;
    write_events_csv(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_events_csv(path: &Path, width: usize, height: usize) -> Result<EventStream> {
    with_path(path, read_events_csv(open(path)?, width, height))
}

/// Gray preview of a histogram: mid-gray for no events, brighter for net ON.
pub fn histogram_preview(h: &EventHistogram) -> ScalarField {
    let net = h.net();
    let m = net.data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let scale = if m > 0.0 { 0.5 / m } else { 0.0 };
    net.map(|a| 0.5 + a * scale).expect("finite preview")
}
