//! File formats: PFM depth, binary PPM/PGM images, Middlebury `.flo` flow,
//! sparse-sample CSV, and the scene dump directory built from them.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, SvdcError};
use crate::flow::FlowField;
use crate::scene::{DepthFrame, SceneFrame, SparseDepth, SparseSample};
use crate::tensor::Tensor;

const FLO_MAGIC: f32 = 202021.25;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SvdcError::Format(msg.into()))
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn header_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    if tok.is_empty() {
        return format_err("truncated header");
    }
    String::from_utf8(tok).map_err(|_| SvdcError::Format("non-UTF-8 header".into()))
}

fn header_usize(r: &mut impl BufRead, what: &str) -> Result<usize> {
    let t = header_token(r)?;
    t.parse().map_err(|_| SvdcError::Format(format!("bad {what} `{t}`")))
}

/// Single-channel little-endian PFM. Invalid pixels are written as 0.
pub fn write_pfm(path: &Path, depth: &DepthFrame) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    // PFM stores rows bottom to top
    for y in (0..h).rev() {
        for x in 0..w {
            let p = y * w + x;
            let v = if depth.valid()[p] { depth.depth()[p] as f32 } else { 0.0 };
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a single-channel PFM; non-finite or non-positive pixels are invalid.
pub fn read_pfm(path: &Path) -> Result<DepthFrame> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if header_token(&mut r)? != "Pf" {
        return format_err(format!("{}: not a single-channel PFM", path.display()));
    }
    let w = header_usize(&mut r, "width")?;
    let h = header_usize(&mut r, "height")?;
    let scale: f64 = header_token(&mut r)?.parse().map_err(|_| SvdcError::Format("bad PFM scale".into()))?;
    let mut raw = vec![0u8; 4 * w * h];
    r.read_exact(&mut raw).map_err(|_| SvdcError::Format(format!("{}: truncated PFM data", path.display())))?;
    let mut depth = vec![0.0; w * h];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4-byte chunk");
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (i / w, i % w);
        depth[(h - 1 - row) * w + x] = v as f64;
    }
    let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect::<Vec<_>>();
    for (d, &ok) in depth.iter_mut().zip(&valid) {
        if !ok {
            *d = 0.0;
        }
    }
    DepthFrame::new(h, w, depth, valid)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 image from a `[3, H, W]` tensor in `[0, 1]`.
pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(SvdcError::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut bytes = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            bytes.push(to_byte(rgb.data()[ch * hw + p]));
        }
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if header_token(&mut r)? != "P6" {
        return format_err(format!("{}: not a binary PPM", path.display()));
    }
    let w = header_usize(&mut r, "width")?;
    let h = header_usize(&mut r, "height")?;
    let maxval = header_usize(&mut r, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return format_err(format!("unsupported PPM maxval {maxval}"));
    }
    let hw = h * w;
    let mut bytes = vec![0u8; 3 * hw];
    r.read_exact(&mut bytes).map_err(|_| SvdcError::Format(format!("{}: truncated PPM data", path.display())))?;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = bytes[3 * p + ch] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Binary P5 mask, 255 for `true`.
pub fn write_pgm_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(SvdcError::Shape("mask size mismatch".into()));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(&mask.iter().map(|&m| if m { 255 } else { 0 }).collect::<Vec<u8>>())?;
    out.flush()?;
    Ok(())
}

pub fn read_pgm_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    if header_token(&mut r)? != "P5" {
        return format_err(format!("{}: not a binary PGM", path.display()));
    }
    let w = header_usize(&mut r, "width")?;
    let h = header_usize(&mut r, "height")?;
    header_usize(&mut r, "maxval")?;
    let mut bytes = vec![0u8; h * w];
    r.read_exact(&mut bytes).map_err(|_| SvdcError::Format(format!("{}: truncated PGM data", path.display())))?;
    Ok((bytes.iter().map(|&b| b >= 128).collect(), h, w))
}

/// Middlebury `.flo`: magic, i32 width, i32 height, interleaved f32 `(du, dv)`.
/// Occlusion is not part of the format.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&FLO_MAGIC.to_le_bytes())?;
    out.write_all(&(w as i32).to_le_bytes())?;
    out.write_all(&(h as i32).to_le_bytes())?;
    for (du, dv) in flow.du().iter().zip(flow.dv()) {
        out.write_all(&(*du as f32).to_le_bytes())?;
        out.write_all(&(*dv as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || f32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) != FLO_MAGIC {
        return format_err(format!("{}: missing PIEH magic", path.display()));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if w <= 0 || h <= 0 {
        return format_err(format!("{}: bad flow size {w}x{h}", path.display()));
    }
    let (w, h) = (w as usize, h as usize);
    let hw = h * w;
    if bytes.len() != 12 + 8 * hw {
        return format_err(format!("{}: flow payload has wrong length", path.display()));
    }
    let mut flow = vec![0.0; 2 * hw];
    for p in 0..hw {
        let o = 12 + 8 * p;
        flow[p] = f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64;
        flow[hw + p] = f32::from_le_bytes(bytes[o + 4..o + 8].try_into().expect("4 bytes")) as f64;
    }
    FlowField::new(h, w, flow, vec![false; hw])
}

pub fn write_sparse_csv(path: &Path, sparse: &SparseDepth) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "u,v,depth")?;
    for s in &sparse.samples {
        writeln!(out, "{},{},{}", s.u, s.v, s.depth)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sparse_csv(path: &Path, frame_index: usize) -> Result<SparseDepth> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("u,v,depth") {
        return format_err(format!("{}: expected header `u,v,depth`", path.display()));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| SvdcError::Format(format!("{}:{}: bad number", path.display(), i + 2)))?;
        if vals.len() != 3 {
            return format_err(format!("{}:{}: expected 3 columns", path.display(), i + 2));
        }
        samples.push(SparseSample { u: vals[0], v: vals[1], depth: vals[2] });
    }
    Ok(SparseDepth { samples, frame_index })
}

/// A rendered clip with its simulated sensor readout.
#[derive(Clone, Debug)]
pub struct Clip {
    pub frames: Vec<SceneFrame>,
    pub sparse: Vec<SparseDepth>,
}

fn frame_path(dir: &Path, stem: &str, n: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{n:04}.{ext}"))
}

/// Writes `frame_NNNN.{pfm,ppm}`, `flow_NNNN.flo` (frame n to n-1),
/// `flowfwd_NNNN.flo` (n to n+1), `occ_NNNN.pgm` / `occfwd_NNNN.pgm`, and
/// `sparse_NNNN.csv`.
pub fn dump_clip(dir: &Path, clip: &Clip) -> Result<()> {
    if clip.frames.len() != clip.sparse.len() {
        return Err(SvdcError::InvalidArgument("one sparse readout per frame required".into()));
    }
    fs::create_dir_all(dir)?;
    for (n, (f, s)) in clip.frames.iter().zip(&clip.sparse).enumerate() {
        let (h, w) = (f.depth.height(), f.depth.width());
        write_pfm(&frame_path(dir, "frame", n, "pfm"), &f.depth)?;
        write_ppm(&frame_path(dir, "frame", n, "ppm"), &f.guidance)?;
        write_flo(&frame_path(dir, "flow", n, "flo"), &f.flow_bwd)?;
        write_flo(&frame_path(dir, "flowfwd", n, "flo"), &f.flow_fwd)?;
        write_pgm_mask(&frame_path(dir, "occ", n, "pgm"), f.flow_bwd.occluded(), h, w)?;
        write_pgm_mask(&frame_path(dir, "occfwd", n, "pgm"), f.flow_fwd.occluded(), h, w)?;
        write_sparse_csv(&frame_path(dir, "sparse", n, "csv"), s)?;
    }
    Ok(())
}

fn load_flow(dir: &Path, stem: &str, occ_stem: &str, n: usize) -> Result<FlowField> {
    let mut flow = read_flo(&frame_path(dir, stem, n, "flo"))?;
    let occ_path = frame_path(dir, occ_stem, n, "pgm");
    if occ_path.exists() {
        let (occ, h, w) = read_pgm_mask(&occ_path)?;
        if (h, w) != (flow.height(), flow.width()) {
            return format_err(format!("{}: size differs from flow", occ_path.display()));
        }
        flow.set_occluded(occ)?;
    }
    Ok(flow)
}

/// Loads a clip written by [`dump_clip`]. Surface ids are not stored, so
/// `ids` is empty. A missing forward flow falls back to zero flow marked
/// fully occluded.
pub fn load_clip(dir: &Path) -> Result<Clip> {
    let mut frames = Vec::new();
    let mut sparse = Vec::new();
    for n in 0.. {
        let depth_path = frame_path(dir, "frame", n, "pfm");
        if !depth_path.exists() {
            break;
        }
        let depth = read_pfm(&depth_path)?;
        let guidance = read_ppm(&frame_path(dir, "frame", n, "ppm"))?;
        let (h, w) = (depth.height(), depth.width());
        if guidance.shape()[1..] != [h, w] {
            return format_err(format!("frame {n}: guidance and depth sizes differ"));
        }
        let flow_bwd = load_flow(dir, "flow", "occ", n)?;
        let flow_fwd = if frame_path(dir, "flowfwd", n, "flo").exists() {
            load_flow(dir, "flowfwd", "occfwd", n)?
        } else {
            let mut f = FlowField::zeros(h, w);
            f.set_occluded(vec![true; h * w])?;
            f
        };
        for f in [&flow_bwd, &flow_fwd] {
            if (f.height(), f.width()) != (h, w) {
                return format_err(format!("frame {n}: flow size differs from depth"));
            }
        }
        sparse.push(read_sparse_csv(&frame_path(dir, "sparse", n, "csv"), n)?);
        frames.push(SceneFrame { guidance, depth, flow_fwd, flow_bwd, ids: Vec::new() });
    }
    if frames.is_empty() {
        return format_err(format!("{}: no frame_0000.pfm found", dir.display()));
    }
    Ok(Clip { frames, sparse })
}

/// Loads either a single clip directory or a directory of clip directories
/// (sorted by name).
pub fn load_corpus(dir: &Path) -> Result<Vec<Clip>> {
    if frame_path(dir, "frame", 0, "pfm").exists() {
        return Ok(vec![load_clip(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && frame_path(p, "frame", 0, "pfm").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return format_err(format!("{}: no clips found", dir.display()));
    }
    subdirs.iter().map(|p| load_clip(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, simulate_dtof, DToFConfig, LayoutParams, SceneConfig};

    #[test]
    fn pfm_round_trip_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let depth: Vec<f64> = (0..12).map(|i| 1.0 + i as f64 * 0.25).collect();
        let mut valid = vec![true; 12];
        valid[5] = false;
        let mut masked = depth.clone();
        masked[5] = 0.0;
        let d = DepthFrame::new(3, 4, masked, valid).unwrap();
        write_pfm(&path, &d).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"Pf\n4 3\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // first stored row is the bottom image row
        assert_eq!(f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap()), 3.0);
        assert_eq!(read_pfm(&path).unwrap(), d);
    }

    #[test]
    fn ppm_and_flo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Tensor::from_fn(&[3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0);
        write_ppm(&dir.path().join("a.ppm"), &rgb).unwrap();
        assert_eq!(read_ppm(&dir.path().join("a.ppm")).unwrap(), rgb);

        let flow = FlowField::new(2, 3, vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75, 1.0, 1.0, 1.0, -2.0, 0.25, 8.0], vec![false; 6]).unwrap();
        let p = dir.path().join("f.flo");
        write_flo(&p, &flow).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(bytes.len(), 12 + 6 * 8);
        assert_eq!(read_flo(&p).unwrap(), flow);
    }

    #[test]
    fn sparse_csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = SparseDepth {
            samples: vec![SparseSample { u: 1.0 / 3.0, v: 2.5, depth: 1.234_567_890_123 }],
            frame_index: 4,
        };
        write_sparse_csv(&p, &s).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("u,v,depth\n"));
        assert_eq!(read_sparse_csv(&p, 4).unwrap(), s);
        fs::write(&p, "x,y\n1,2\n").unwrap();
        assert!(read_sparse_csv(&p, 0).is_err());
        fs::write(&p, "u,v,depth\n1,2\n").unwrap();
        assert!(read_sparse_csv(&p, 0).is_err());
    }

    #[test]
    fn clip_dump_reloads_exactly() {
        let cfg = SceneConfig::random(11, 16, 20, 3, 90.0, LayoutParams::default());
        let frames = generate_scene(&cfg).unwrap();
        let sparse = frames
            .iter()
            .enumerate()
            .map(|(i, f)| simulate_dtof(&f.depth, &f.guidance, &DToFConfig::default(), i).unwrap())
            .collect();
        let clip = Clip { frames, sparse };
        let dir = tempfile::tempdir().unwrap();
        dump_clip(dir.path(), &clip).unwrap();
        let back = load_clip(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        for (a, b) in clip.frames.iter().zip(&back.frames) {
            assert_eq!(a.guidance, b.guidance);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.flow_bwd, b.flow_bwd);
            assert_eq!(a.flow_fwd, b.flow_fwd);
        }
        assert_eq!(clip.sparse, back.sparse);
        assert_eq!(load_corpus(dir.path()).unwrap().len(), 1);
    }
}
