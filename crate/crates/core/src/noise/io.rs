//! Columnar binary and CSV serialization of ensembles.
//!
//! Binary layout: the magic bytes `JSMPENS1`, a little-endian `u32` header
//! length, a JSON header, then six columns of `n_paths * n_steps * n_marks`
//! entries each: path (`u32`), step (`u32`), mark (`u32`), increment
//! (`f64`), intensity (`f64`), count (`u32`).

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{MarkSpace, NoiseModel, PathEnsemble, TimeGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"JSMPENS1";

#[derive(Serialize, Deserialize)]
struct Header {
    grid: TimeGrid,
    marks: MarkSpace,
    seed: u64,
    n_paths: usize,
    model: NoiseModel,
    counting: bool,
}

pub fn write_binary<W: Write>(ensemble: &PathEnsemble, mut w: W) -> Result<()> {
    let header = Header {
        grid: ensemble.grid().clone(),
        marks: ensemble.marks().clone(),
        seed: ensemble.seed(),
        n_paths: ensemble.n_paths(),
        model: ensemble.model().clone(),
        counting: ensemble.is_counting(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(json.len() as u32)?;
    w.write_all(&json)?;
    let (n, k_steps, m) = (ensemble.n_paths(), ensemble.n_steps(), ensemble.n_marks());
    let cells = || (0..n).flat_map(move |p| (0..k_steps).flat_map(move |k| (0..m).map(move |z| (p, k, z))));
    for (p, _, _) in cells() {
        w.write_u32::<LittleEndian>(p as u32)?;
    }
    for (_, k, _) in cells() {
        w.write_u32::<LittleEndian>(k as u32)?;
    }
    for (_, _, z) in cells() {
        w.write_u32::<LittleEndian>(z as u32)?;
    }
    for v in ensemble.increments() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for v in ensemble.intensities() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for (p, k, z) in cells() {
        w.write_u32::<LittleEndian>(ensemble.count(p, k, z))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<PathEnsemble> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an ensemble file".into()));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    let total = h.n_paths * h.grid.n_steps() * h.marks.len();
    let read_u32 = |r: &mut R| -> Result<Vec<u32>> {
        let mut v = vec![0u32; total];
        r.read_u32_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let paths = read_u32(&mut r)?;
    let steps = read_u32(&mut r)?;
    let marks = read_u32(&mut r)?;
    let (k_steps, m) = (h.grid.n_steps(), h.marks.len());
    for i in 0..total {
        let expect = (i / (k_steps * m), (i / m) % k_steps, i % m);
        if (paths[i] as usize, steps[i] as usize, marks[i] as usize) != expect {
            return Err(Error::Format(format!("index columns out of order at row {i}")));
        }
    }
    let mut increments = vec![0.0; total];
    r.read_f64_into::<LittleEndian>(&mut increments)?;
    let mut intensity = vec![0.0; total];
    r.read_f64_into::<LittleEndian>(&mut intensity)?;
    let mut counts = vec![0u32; total];
    r.read_u32_into::<LittleEndian>(&mut counts)?;
    PathEnsemble::from_parts(
        h.model,
        h.grid,
        h.marks,
        h.seed,
        increments,
        intensity,
        h.counting.then_some(counts),
    )
}

pub fn write_csv<W: Write>(ensemble: &PathEnsemble, mut w: W) -> Result<()> {
    writeln!(w, "path,step,mark,increment,intensity,count")?;
    for p in 0..ensemble.n_paths() {
        for k in 0..ensemble.n_steps() {
            for z in 0..ensemble.n_marks() {
                writeln!(
                    w,
                    "{p},{k},{},{},{},{}",
                    ensemble.marks().labels()[z],
                    ensemble.increment(p, k, z),
                    ensemble.intensity(p, k, z),
                    ensemble.count(p, k, z)
                )?;
            }
        }
    }
    Ok(())
}
