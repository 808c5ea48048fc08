//! Binary dataset persistence.  Little-endian layout:
//!
//! ```text
//! magic "PSEA" | u32 version | u32 points-per-cloud | u32 sample count
//! then per sample: u32 label | points*3 f64 coordinates
//! ```
//!
//! Round trips are bitwise exact; parse failures report the byte offset.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, PointCloudSample};
use crate::tensor::Array;

const MAGIC: [u8; 4] = *b"PSEA";
const VERSION: u32 = 1;

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.points as u32).to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u32).to_le_bytes())?;
    for s in &ds.samples {
        w.write_all(&s.label.to_le_bytes())?;
        for &v in s.points.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), DataError> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(DataError::Parse {
                offset: at,
                what: format!("unexpected end of file while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut r = Counting { inner: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Parse {
            offset: 0,
            what: format!("bad magic {magic:?}, expected \"PSEA\""),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DataError::Version { found: version, expect: VERSION });
    }
    let points = r.u32("points per cloud")? as usize;
    let count = r.u32("sample count")? as usize;
    if points == 0 {
        return Err(DataError::Parse { offset: 8, what: "points per cloud is zero".into() });
    }
    let mut samples = Vec::with_capacity(count);
    for id in 0..count {
        let label = r.u32("sample label")?;
        let mut data = Vec::with_capacity(points * 3);
        for _ in 0..points * 3 {
            let at = r.offset;
            let v = r.f64("coordinate")?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    offset: at,
                    what: format!("non-finite coordinate {v}"),
                });
            }
            data.push(v);
        }
        samples.push(PointCloudSample {
            points: Array::new(vec![points, 3], data).expect("points*3 coordinates"),
            label,
            id: id as u32,
        });
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(DataError::Parse {
            offset: r.offset,
            what: "trailing bytes after final sample".into(),
        });
    }
    Ok(Dataset { samples, points })
}
