//! Binary grid and clip files. All integers and floats are little-endian.
//!
//! Grid: `"OCG1"`, u32 H, W, D, n_classes, f32 resolution, 3 x f32 origin,
//! then H*W*D class bytes in x-major order.
//! Clip: `"OCLP"`, u32 frame count, one grid record per frame, then per frame
//! 3 x f64 pose and f64 timestamp.

use std::io::{Read, Write};
use std::path::Path;

use super::clip::{Pose, SequenceClip};
use super::grid::OccupancyGrid;
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"OCG1";
pub const CLIP_MAGIC: &[u8; 4] = b"OCLP";
pub const GRID_HEADER_BYTES: usize = 36;

/// Largest voxel count accepted when reading.
const MAX_VOXELS: u64 = 1 << 32;

pub fn write_grid<W: Write>(w: &mut W, g: &OccupancyGrid) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    for d in g.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&g.n_classes().to_le_bytes())?;
    w.write_all(&g.resolution().to_le_bytes())?;
    for o in g.origin() {
        w.write_all(&o.to_le_bytes())?;
    }
    w.write_all(g.classes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r, what)?))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<OccupancyGrid> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "grid magic")?;
    if &magic != GRID_MAGIC {
        return Err(Error::Format(format!("bad grid magic {magic:?}")));
    }
    let dims = [read_u32(r, "dims")?, read_u32(r, "dims")?, read_u32(r, "dims")?];
    let n_classes = read_u32(r, "class count")?;
    let resolution = read_f32(r, "resolution")?;
    let origin = [read_f32(r, "origin")?, read_f32(r, "origin")?, read_f32(r, "origin")?];
    let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(u64::from(d)));
    let n = match n {
        Some(n) if n <= MAX_VOXELS => n as usize,
        _ => return Err(Error::Format(format!("grid dims {dims:?} overflow"))),
    };
    let mut classes = vec![0u8; n];
    read_exact(r, &mut classes, "class ids")?;
    let dims = dims.map(|d| d as usize);
    OccupancyGrid::new(dims, resolution, origin, n_classes, classes)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_clip<W: Write>(w: &mut W, clip: &SequenceClip) -> Result<()> {
    w.write_all(CLIP_MAGIC)?;
    let n = u32::try_from(clip.len()).map_err(|_| Error::Format("too many frames".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for g in clip.frames() {
        write_grid(w, g)?;
    }
    for (p, t) in clip.poses().iter().zip(clip.timestamps()) {
        for v in [p.x, p.y, p.yaw, *t] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_clip<R: Read>(r: &mut R) -> Result<SequenceClip> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "clip magic")?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Format(format!("bad clip magic {magic:?}")));
    }
    let n = read_u32(r, "frame count")? as usize;
    let mut frames = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        frames.push(read_grid(r)?);
    }
    let (mut poses, mut stamps) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (x, y, yaw) = (read_f64(r, "pose")?, read_f64(r, "pose")?, read_f64(r, "pose")?);
        poses.push(Pose::new(x, y, yaw));
        stamps.push(read_f64(r, "timestamp")?);
    }
    SequenceClip::new(frames, poses, stamps).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_grid(path: impl AsRef<Path>, g: &OccupancyGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(GRID_HEADER_BYTES + g.len());
    write_grid(&mut buf, g)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<OccupancyGrid> {
    let bytes = std::fs::read(path)?;
    let mut slice = bytes.as_slice();
    let g = read_grid(&mut slice)?;
    if !slice.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", slice.len())));
    }
    Ok(g)
}

pub fn save_clip(path: impl AsRef<Path>, clip: &SequenceClip) -> Result<()> {
    let mut buf = Vec::new();
    write_clip(&mut buf, clip)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<SequenceClip> {
    let bytes = std::fs::read(path)?;
    let mut slice = bytes.as_slice();
    let c = read_clip(&mut slice)?;
    if !slice.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", slice.len())));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{below, seeded};
    use crate::occupancy::synth::{synth_scene, Domain};

    fn random_grid(seed: u64, dims: [usize; 3]) -> OccupancyGrid {
        let mut rng = seeded(seed);
        let n = dims.iter().product();
        let classes = (0..n).map(|_| below(&mut rng, 5) as u8).collect();
        OccupancyGrid::new(dims, 0.4, [-1.5, 2.0, -0.25], 5, classes).unwrap()
    }

    #[test]
    fn grid_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ocg");
        let g = random_grid(1, [7, 5, 3]);
        save_grid(&path, &g).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 36 + 7 * 5 * 3);
        assert_eq!(load_grid(&path).unwrap(), g);
    }

    #[test]
    fn header_layout() {
        let g = random_grid(2, [2, 3, 4]);
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        assert_eq!(&buf[0..4], b"OCG1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 5);
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 0.4);
        assert_eq!(buf[36..], *g.classes());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut buf = Vec::new();
        write_grid(&mut buf, &random_grid(3, [2, 2, 2])).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_grid(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let mut buf = Vec::new();
        write_grid(&mut buf, &random_grid(4, [3, 3, 3])).unwrap();
        for cut in [3, 20, buf.len() - 1] {
            assert!(matches!(read_grid(&mut &buf[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn dim_overflow_rejected() {
        let mut buf = Vec::new();
        write_grid(&mut buf, &random_grid(5, [1, 1, 1])).unwrap();
        for i in 0..3 {
            buf[4 + 4 * i..8 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(read_grid(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn clip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.oclp");
        let clip = synth_scene(Domain::Semantic, 9, 4).unwrap();
        save_clip(&path, &clip).unwrap();
        let g = &clip.frames()[0];
        let want = 8 + 4 * (36 + g.len()) + 4 * 32;
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, want);
        assert_eq!(load_clip(&path).unwrap(), clip);
    }
}
