//! Track files.
//!
//! Text layout: `RTRK 1`, then `N T width height fx fy cx cy`, then `N·T`
//! rows `i t x y v` with `v ∈ {0,1}`. Invisible rows may carry `nan nan`.
//!
//! Binary layout: magic `RTRKB1`, little-endian `u64` N, T, width, height,
//! `f64` fx, fy, cx, cy, then `N·T` track-major records of three `f32`
//! values `x y v`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector2;

use super::TrackSet;
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;

const TEXT_MAGIC: &str = "RTRK 1";
const BINARY_MAGIC: &[u8; 6] = b"RTRKB1";

pub fn load_tracks(path: impl AsRef<Path>) -> Result<TrackSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tracks(BufReader::new(file))
}

pub fn save_tracks(tracks: &TrackSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tracks(tracks, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_tracks_binary(tracks: &TrackSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tracks_binary(tracks, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads either layout, dispatching on the magic bytes.
pub fn read_tracks<R: BufRead>(mut reader: R) -> Result<TrackSet> {
    let head = reader.fill_buf().map_err(|e| Error::io("<tracks>", e))?;
    if head.starts_with(BINARY_MAGIC) {
        read_binary(reader)
    } else {
        read_text(reader)
    }
}

pub fn write_tracks<W: Write>(tracks: &TrackSet, w: &mut W) -> std::io::Result<()> {
    let k = &tracks.intrinsics;
    writeln!(w, "{TEXT_MAGIC}")?;
    writeln!(
        w,
        "{} {} {} {} {} {} {} {}",
        tracks.n_tracks(),
        tracks.n_frames(),
        tracks.image_size.0,
        tracks.image_size.1,
        k.fx,
        k.fy,
        k.cx,
        k.cy
    )?;
    for i in 0..tracks.n_tracks() {
        for t in 0..tracks.n_frames() {
            if tracks.is_visible(i, t) {
                let p = tracks.position(i, t);
                writeln!(w, "{i} {t} {} {} 1", p.x, p.y)?;
            } else {
                writeln!(w, "{i} {t} nan nan 0")?;
            }
        }
    }
    Ok(())
}

pub fn write_tracks_binary<W: Write>(tracks: &TrackSet, w: &mut W) -> std::io::Result<()> {
    let k = &tracks.intrinsics;
    w.write_all(BINARY_MAGIC)?;
    for v in [
        tracks.n_tracks() as u64,
        tracks.n_frames() as u64,
        tracks.image_size.0 as u64,
        tracks.image_size.1 as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [k.fx, k.fy, k.cx, k.cy] {
        w.write_all(&v.to_le_bytes())?;
    }
    for (p, &vis) in tracks.positions().iter().zip(tracks.visibility()) {
        for v in [p.x as f32, p.y as f32, if vis { 1.0f32 } else { 0.0 }] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn validate_dims(n: usize, t: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::Validation(format!(
            "need at least 4 tracks, header declares {n}"
        )));
    }
    if t < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 frames, header declares {t}"
        )));
    }
    Ok(())
}

fn expect_line(
    lines: &mut impl Iterator<Item = (usize, std::io::Result<String>)>,
    what: &str,
) -> Result<(usize, String)> {
    match lines.next() {
        Some((no, Ok(l))) => Ok((no, l)),
        Some((no, Err(e))) => Err(Error::parse(no, e.to_string())),
        None => Err(Error::parse(
            1,
            format!("unexpected end of file, expected {what}"),
        )),
    }
}

fn read_text<R: BufRead>(reader: R) -> Result<TrackSet> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (no, magic) = expect_line(&mut lines, "magic")?;
    if magic.trim() != TEXT_MAGIC {
        return Err(Error::parse(
            no,
            format!("expected `{TEXT_MAGIC}`, found `{}`", magic.trim()),
        ));
    }
    let (no, header) = expect_line(&mut lines, "header")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(Error::parse(
            no,
            format!("header needs 8 fields, found {}", fields.len()),
        ));
    }
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))
    };
    let float = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))
    };
    let (n, t_count, width, height) = (
        int(fields[0])?,
        int(fields[1])?,
        int(fields[2])?,
        int(fields[3])?,
    );
    let k = Intrinsics::new(
        float(fields[4])?,
        float(fields[5])?,
        float(fields[6])?,
        float(fields[7])?,
    )?;
    validate_dims(n, t_count)?;

    let total = n * t_count;
    let mut positions = vec![Vector2::new(f64::NAN, f64::NAN); total];
    let mut visibility = vec![false; total];
    let mut seen = vec![false; total];
    let mut rows = 0usize;
    let mut last_line = no;
    for (no, line) in lines {
        let line = line.map_err(|e| Error::parse(no, e.to_string()))?;
        last_line = no;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 5 {
            return Err(Error::parse(
                no,
                format!("row needs 5 fields, found {}", f.len()),
            ));
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))
        };
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(no, format!("`{s}`: {e}")))
        };
        let (i, t) = (parse_idx(f[0])?, parse_idx(f[1])?);
        if i >= n || t >= t_count {
            return Err(Error::parse(
                no,
                format!("row ({i}, {t}) outside the declared {n} tracks x {t_count} frames"),
            ));
        }
        let idx = i * t_count + t;
        if seen[idx] {
            return Err(Error::parse(
                no,
                format!("duplicate row for track {i} frame {t}"),
            ));
        }
        seen[idx] = true;
        let vis = match f[4] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::parse(
                    no,
                    format!("visibility must be 0 or 1, found `{other}`"),
                ))
            }
        };
        if vis {
            let p = Vector2::new(parse_f(f[2])?, parse_f(f[3])?);
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::parse(no, "visible row has a non-finite position"));
            }
            positions[idx] = p;
        }
        visibility[idx] = vis;
        rows += 1;
    }
    if rows != total {
        return Err(Error::parse(
            last_line + 1,
            format!("expected {total} rows for {n} tracks x {t_count} frames, found {rows}"),
        ));
    }
    TrackSet::new(n, t_count, positions, visibility, k, (width, height))
}

fn read_binary<R: Read>(mut reader: R) -> Result<TrackSet> {
    let mut buf = Vec::new();
    reader
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("<tracks>", e))?;
    let mut cursor = BINARY_MAGIC.len();
    let mut take = |len: usize| -> Result<&[u8]> {
        let end = cursor + len;
        let slice = buf.get(cursor..end).ok_or_else(|| {
            Error::parse(0, format!("binary track file truncated at byte {cursor}"))
        })?;
        cursor = end;
        Ok(slice)
    };
    let mut header = [0u64; 4];
    for h in header.iter_mut() {
        *h = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    }
    let mut intr = [0f64; 4];
    for v in intr.iter_mut() {
        *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    }
    let (n, t_count) = (header[0] as usize, header[1] as usize);
    validate_dims(n, t_count)?;
    let k = Intrinsics::new(intr[0], intr[1], intr[2], intr[3])?;
    let total = n * t_count;
    let mut positions = Vec::with_capacity(total);
    let mut visibility = Vec::with_capacity(total);
    for _ in 0..total {
        let rec = take(12)?;
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes"));
        positions.push(Vector2::new(f64::from(f(0)), f64::from(f(4))));
        visibility.push(f(8) != 0.0);
    }
    if cursor != buf.len() {
        return Err(Error::parse(
            0,
            format!("{} trailing bytes after records", buf.len() - cursor),
        ));
    }
    TrackSet::new(
        n,
        t_count,
        positions,
        visibility,
        k,
        (header[2] as usize, header[3] as usize),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize, t: usize, coords: &[(f64, f64, bool)]) -> TrackSet {
        let k = Intrinsics::new(120.0, 110.0, 64.0, 48.0).unwrap();
        let pos = coords.iter().map(|c| Vector2::new(c.0, c.1)).collect();
        let vis = coords.iter().map(|c| c.2).collect();
        TrackSet::new(n, t, pos, vis, k, (128, 96)).unwrap()
    }

    fn text_of(ts: &TrackSet) -> String {
        let mut buf = Vec::new();
        write_tracks(ts, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    proptest! {
        #[test]
        fn text_round_trip(n in 4usize..7, t in 2usize..5,
                           seed in prop::collection::vec((0.0f64..128.0, 0.0f64..96.0, any::<bool>()), 36)) {
            let ts = sample(n, t, &seed[..n * t]);
            let back = read_tracks(text_of(&ts).as_bytes()).unwrap();
            // NaN != NaN, so compare through the text form and visibility.
            prop_assert_eq!(back.visibility(), ts.visibility());
            prop_assert_eq!(text_of(&back), text_of(&ts));
        }

        #[test]
        fn binary_round_trip_for_f32_values(n in 4usize..7, t in 2usize..5,
                           seed in prop::collection::vec((0.0f32..128.0, 0.0f32..96.0, any::<bool>()), 36)) {
            let coords: Vec<_> = seed.iter().map(|c| (f64::from(c.0), f64::from(c.1), c.2)).collect();
            let ts = sample(n, t, &coords[..n * t]);
            let mut buf = Vec::new();
            write_tracks_binary(&ts, &mut buf).unwrap();
            let back = read_tracks(&buf[..]).unwrap();
            prop_assert_eq!(text_of(&back), text_of(&ts));
        }
    }

    #[test]
    fn zero_tracks_is_a_validation_error() {
        let text = "RTRK 1\n0 3 64 64 50 50 32 32\n";
        assert!(matches!(
            read_tracks(text.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn row_count_mismatch_names_the_line() {
        let mut text = String::from("RTRK 1\n4 2 64 64 50 50 32 32\n");
        for i in 0..5 {
            for t in 0..2 {
                text.push_str(&format!("{i} {t} 1 1 1\n"));
            }
        }
        // Rows for track 4 start on line 11.
        match read_tracks(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("unexpected {other:?}"),
        }

        let short = "RTRK 1\n4 2 64 64 50 50 32 32\n0 0 1 1 1\n0 1 1 1 1\n";
        match read_tracks(short.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 5);
                assert!(message.contains("expected 8 rows"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_visible_point_is_a_validation_error() {
        let mut text = String::from("RTRK 1\n4 2 64 64 50 50 32 32\n");
        for i in 0..4 {
            for t in 0..2 {
                let x = if i == 2 && t == 1 { 64.0 } else { 1.0 };
                text.push_str(&format!("{i} {t} {x} 1 1\n"));
            }
        }
        assert!(matches!(
            read_tracks(text.as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn malformed_header_is_a_parse_error() {
        let text = "RTRK 1\n4 2 64 64 50 50\n";
        assert!(matches!(
            read_tracks(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let text = "TRACKS\n";
        assert!(matches!(
            read_tracks(text.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
