//! Binary containers for latent clips and anchor sets.
//!
//! Latent clip (`.lat`), all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "AVLT"
//! version u32      currently 1
//! dims    u32 x 4  frames, height, width, channels
//! payload f64 LE   frames*height*width*channels values, row-major
//! ```
//!
//! Anchor set (`.anc`):
//!
//! ```text
//! magic   4 bytes  "AVAS"
//! version u32      currently 1
//! global  u8       1 if a global anchor follows, else 0
//! [global clip block]
//! n_viewpoints u32, then per entry: sub u32, clip block
//! n_expressions u32, then per entry: sub u32, clip block
//! ```
//!
//! where a clip block is the latent layout above minus magic/version.
//! Payloads stay f64 so a save/load round trip is bit-exact — latents are
//! small here and exactness matters more than file size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{AnchorSet, Expression, LatentVideo, Viewpoint};
use crate::tensor::Tensor;

const LATENT_MAGIC: &[u8; 4] = b"AVLT";
const ANCHOR_MAGIC: &[u8; 4] = b"AVAS";
const VERSION: u32 = 1;

pub fn save_latent(path: &Path, v: &LatentVideo) -> Result<()> {
    let ctx = || format!("writing latent {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(LATENT_MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&VERSION.to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    write_clip_block(&mut w, v).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

pub fn load_latent(path: &Path) -> Result<LatentVideo> {
    let ctx = || format!("reading latent {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != LATENT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = read_u32(&mut r).ok_or_else(|| fmt("truncated header"))?;
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {}", version)));
    }
    read_clip_block(&mut r, &fmt)
}

pub fn save_anchor_set(path: &Path, anchors: &AnchorSet) -> Result<()> {
    let ctx = || format!("writing anchor set {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let go = |e| Error::io(ctx(), e);
    w.write_all(ANCHOR_MAGIC).map_err(go)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(go)?;
    w.write_all(&[u8::from(anchors.global.is_some())])
        .map_err(go)?;
    if let Some(g) = &anchors.global {
        write_clip_block(&mut w, g).map_err(go)?;
    }
    w.write_all(&(anchors.viewpoints.len() as u32).to_le_bytes())
        .map_err(go)?;
    for (&sub, clip) in &anchors.viewpoints {
        w.write_all(&(sub as u32).to_le_bytes()).map_err(go)?;
        write_clip_block(&mut w, clip).map_err(go)?;
    }
    w.write_all(&(anchors.expressions.len() as u32).to_le_bytes())
        .map_err(go)?;
    for (&sub, clip) in &anchors.expressions {
        w.write_all(&(sub as u32).to_le_bytes()).map_err(go)?;
        write_clip_block(&mut w, clip).map_err(go)?;
    }
    w.flush().map_err(go)?;
    Ok(())
}

pub fn load_anchor_set(path: &Path) -> Result<AnchorSet> {
    let ctx = || format!("reading anchor set {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: &str| Error::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != ANCHOR_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = read_u32(&mut r).ok_or_else(|| fmt("truncated header"))?;
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {}", version)));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|_| fmt("truncated header"))?;

    let mut anchors = AnchorSet::empty();
    if flag[0] == 1 {
        anchors.global = Some(read_clip_block(&mut r, &fmt)?);
    } else if flag[0] != 0 {
        return Err(fmt("bad global-anchor flag"));
    }
    let n_vp = read_u32(&mut r).ok_or_else(|| fmt("truncated viewpoint table"))?;
    for _ in 0..n_vp {
        let sub = read_u32(&mut r).ok_or_else(|| fmt("truncated viewpoint entry"))? as usize;
        let vp = Viewpoint::from_index(sub)?;
        let clip = read_clip_block(&mut r, &fmt)?;
        anchors.set_viewpoint(vp, clip)?;
    }
    let n_ex = read_u32(&mut r).ok_or_else(|| fmt("truncated expression table"))?;
    for _ in 0..n_ex {
        let sub = read_u32(&mut r).ok_or_else(|| fmt("truncated expression entry"))? as usize;
        let ex = Expression::from_index(sub)?;
        let clip = read_clip_block(&mut r, &fmt)?;
        anchors.set_expression(ex, clip)?;
    }
    Ok(anchors)
}

fn write_clip_block(w: &mut impl Write, v: &LatentVideo) -> std::io::Result<()> {
    for d in [v.frames(), v.height(), v.width(), v.channels()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in v.data().data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_clip_block(
    r: &mut impl Read,
    fmt: &impl Fn(&str) -> Error,
) -> Result<LatentVideo> {
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = read_u32(r).ok_or_else(|| fmt("truncated dims"))? as usize;
    }
    let numel: usize = dims.iter().product();
    // Refuse absurd headers before allocating.
    if numel > 1 << 28 {
        return Err(fmt("clip dims unreasonably large"));
    }
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf).map_err(|_| fmt("truncated payload"))?;
        data.push(f64::from_le_bytes(buf));
    }
    LatentVideo::new(Tensor::from_vec(dims.to_vec(), data)?)
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).ok()?;
    Some(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(t: usize, h: usize, w: usize, c: usize, seed: u64) -> LatentVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentVideo::new(Tensor::randn(&[t, h, w, c], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn latent_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.lat");
        let v = random_latent(3, 4, 4, 2, 1);
        save_latent(&path, &v).unwrap();
        let back = load_latent(&path).unwrap();
        assert_eq!(back.data(), v.data());
        assert_eq!(
            (back.frames(), back.height(), back.width(), back.channels()),
            (3, 4, 4, 2)
        );
    }

    #[test]
    fn anchor_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.anc");
        let mut anchors = AnchorSet::empty();
        anchors.set_global(random_latent(1, 4, 4, 2, 2)).unwrap();
        anchors
            .set_viewpoint(Viewpoint::Back, random_latent(1, 4, 2, 2, 3))
            .unwrap();
        anchors
            .set_expression(Expression::Happy, random_latent(1, 2, 2, 2, 4))
            .unwrap();
        save_anchor_set(&path, &anchors).unwrap();
        let back = load_anchor_set(&path).unwrap();
        assert_eq!(back.count(), 3);
        assert_eq!(back.global.as_ref().unwrap().data(), anchors.global.as_ref().unwrap().data());
        assert_eq!(
            back.viewpoints[&Viewpoint::Back.index()].data(),
            anchors.viewpoints[&Viewpoint::Back.index()].data()
        );
        assert_eq!(
            back.expressions[&Expression::Happy.index()].data(),
            anchors.expressions[&Expression::Happy.index()].data()
        );
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.lat");
        std::fs::write(&path, b"AVLTxxxx").unwrap();
        assert!(load_latent(&path).is_err());
        let wrong = dir.path().join("wrong.anc");
        let v = random_latent(1, 2, 2, 1, 5);
        save_latent(&wrong, &v).unwrap();
        // A latent file is not an anchor-set file.
        assert!(load_anchor_set(&wrong).is_err());
    }
}
